"""
Experiment harness: wires data, servers and clients together and exports
what happened.

    run_experiment(config)
        1. Load or generate events, build the global feature space
        2. Carve a seeded holdout split (server evaluation), partition the
           rest by region (one client per region)
        3. Resolve the topology: client -> ordered server list, server ->
           expected clients and quorum
        4. Run every server and client concurrently on the simulated network
           (or TCP when every server has a host:port endpoint), with the
           config's FaultPlan injected
        5. Collect a MetricsBundle

    compare(multi, single)   relative final eval-loss gap between best servers
    export(bundle, out_dir)  client_loss.csv, server_loss.csv, delivery.csv,
                             config.json, summary.md
"""

import asyncio
import csv
import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from jinja2 import Environment, FileSystemLoader
from pydantic import BaseModel, ConfigDict, Field

from src.client import ClientRoundReport, run_client
from src.config import ExperimentConfig, TopologyConfig
from src.data import (
    CleaningReport,
    ClientDataset,
    RawEvent,
    build_feature_space,
    encode,
    generate_synthetic,
    load_csvs,
    load_schema_map,
    load_station_map,
    partition_by_region,
    split_holdout,
)
from src.errors import ConfigError, MismatchedConfigs, TopologyError
from src.params import GlobalModel
from src.server import GlobalServer, RoundRecord, RoundStatus, ServerConfig, eval_history, run_server
from src.trainer import initial_weights
from src.transport import (
    DIAL_TIMEOUT_S,
    ServerAddress,
    SimulatedNetwork,
    TcpTransport,
    Transport,
    inject,
)

logger = logging.getLogger(__name__)

FAILED = "FAILED"
TEMPLATE_DIR = Path(__file__).parent / "templates"


# ── Results ────────────────────────────────────────────────────

class MetricsBundle(BaseModel):
    """Everything one experiment produced."""
    rounds: int = 0
    config_snapshot: Dict[str, Any] = Field(default_factory=dict)
    eval_digest: str = ""
    clients: Dict[str, List[ClientRoundReport]] = Field(default_factory=dict)
    servers: Dict[str, List[RoundRecord]] = Field(default_factory=dict)
    cleaning: CleaningReport = Field(default_factory=CleaningReport)
    timings: Dict[str, float] = Field(default_factory=dict)

    def final_loss(self, server_id: str) -> float:
        records = self.servers[server_id]
        return max(records, key=lambda r: r.round).eval_loss

    def best_server(self) -> Optional[str]:
        """Server with the lowest final eval loss (ties go to the lower id)."""
        candidates = [sid for sid, records in self.servers.items() if records]
        if not candidates:
            return None
        return min(sorted(candidates), key=self.final_loss)

    def deliveries(self, round_no: int) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for reports in self.clients.values():
            for report in reports:
                if report.round == round_no:
                    key = report.delivered_to or FAILED
                    counts[key] = counts.get(key, 0) + 1
        return counts

    def failover_count(self) -> int:
        return sum(
            1
            for reports in self.clients.values()
            for report in reports
            if report.delivered and report.failed_attempts
        )


class Comparison(BaseModel):
    multi_server: str
    single_server: str
    multi_final_loss: float
    single_final_loss: float
    relative_final_loss_gap: float
    per_round_gaps: List[float]


# ── Topology ───────────────────────────────────────────────────

class Topology(BaseModel):
    client_servers: Dict[str, List[str]]
    expected: Dict[str, List[str]]
    quorums: Dict[str, int]


def _assign(topology: TopologyConfig, client_ids: List[str]) -> Dict[str, List[str]]:
    server_ids = topology.server_ids
    if topology.assignment == "shared":
        return {cid: list(server_ids) for cid in client_ids}

    if topology.assignment == "disjoint":
        lists: Dict[str, List[str]] = {}
        blocks = np.array_split(np.arange(len(client_ids)), len(server_ids))
        for primary, block in zip(server_ids, blocks):
            order = [primary] + [s for s in server_ids if s != primary]
            for i in block:
                lists[client_ids[int(i)]] = order
        return lists

    missing = [cid for cid in client_ids if not topology.explicit_map.get(cid)]
    if missing:
        raise TopologyError(f"Client(s) without an assigned server: {', '.join(missing)}")
    return {cid: list(topology.explicit_map[cid]) for cid in client_ids}


def build_topology(topology: TopologyConfig, client_ids: List[str]) -> Topology:
    """
    Resolve who talks to whom.

    A server expects every client that lists it. Its quorum defaults to the
    size of its primary cohort (clients listing it first), at least 1.
    """
    if not client_ids:
        raise TopologyError("A federation needs at least one client")
    if topology.clients is not None and topology.clients != len(client_ids):
        raise TopologyError(
            f"topology.clients is {topology.clients} but the data has "
            f"{len(client_ids)} region(s): {', '.join(client_ids)}"
        )

    client_servers = _assign(topology, sorted(client_ids))
    expected: Dict[str, List[str]] = {}
    quorums: Dict[str, int] = {}
    for spec in topology.servers:
        cohort = sorted(cid for cid, servers in client_servers.items() if spec.id in servers)
        if not cohort:
            raise TopologyError(f"Server {spec.id} has no clients")
        primary = sum(1 for servers in client_servers.values() if servers[0] == spec.id)
        quorum = spec.quorum if spec.quorum is not None else max(1, primary)
        if quorum > len(cohort):
            raise TopologyError(
                f"Server {spec.id}: quorum {quorum} exceeds its {len(cohort)} client(s)"
            )
        expected[spec.id] = cohort
        quorums[spec.id] = quorum
    return Topology(client_servers=client_servers, expected=expected, quorums=quorums)


# ── Data ───────────────────────────────────────────────────────

class PreparedData(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    partitions: Dict[str, ClientDataset]
    eval_dataset: ClientDataset
    cleaning: CleaningReport


def load_events(config: ExperimentConfig) -> Tuple[List[RawEvent], CleaningReport]:
    if config.data.source == "synthetic":
        spec = config.data.synthetic
        events = generate_synthetic(spec.rows_per_region, spec.regions, spec.noise_std, config.synthetic_seed)
        return events, CleaningReport(rows_read=len(events), rows_kept=len(events))

    source = config.data.csv
    schema = load_schema_map(source.schema_map) if source.schema_map else None
    stations = load_station_map(source.station_map) if source.station_map else None
    return load_csvs(source.paths, schema, stations)


def prepare_data(config: ExperimentConfig) -> PreparedData:
    events, cleaning = load_events(config)
    space = build_feature_space(events)
    train, holdout = split_holdout(events, config.data.holdout_fraction, config.seed)
    partitions = partition_by_region(train, space.regions, space)
    eval_dataset = encode(holdout, space, region="holdout")
    return PreparedData(partitions=partitions, eval_dataset=eval_dataset, cleaning=cleaning)


def dataset_digest(dataset: ClientDataset) -> str:
    digest = hashlib.sha256()
    digest.update("\n".join(dataset.feature_names).encode("utf-8"))
    digest.update(np.ascontiguousarray(dataset.features).tobytes())
    digest.update(np.ascontiguousarray(dataset.targets).tobytes())
    return digest.hexdigest()


# ── Running ────────────────────────────────────────────────────

def _check_fault_targets(config: ExperimentConfig, client_ids: List[str]) -> None:
    known = set(config.topology.server_ids) | set(client_ids)
    unknown = sorted({f.target for f in config.fault_plan.faults} - known)
    if unknown:
        raise TopologyError(f"Fault plan targets unknown id(s): {', '.join(unknown)}")


def make_transport(config: ExperimentConfig) -> Transport:
    servers = config.topology.servers
    if all(s.endpoint for s in servers):
        base: Transport = TcpTransport(
            fetch_timeout=max(s.round_timeout_s for s in servers) + DIAL_TIMEOUT_S
        )
    else:
        base = SimulatedNetwork(seed=config.seed)
    return inject(config.fault_plan, base)


def server_configs(
    config: ExperimentConfig, topology: Topology, eval_dataset: ClientDataset
) -> List[ServerConfig]:
    return [
        ServerConfig(
            id=spec.id,
            aggregator=spec.aggregator,
            expected_clients=topology.expected[spec.id],
            quorum=topology.quorums[spec.id],
            rounds=config.rounds,
            round_timeout_s=spec.round_timeout_s,
            endpoint=spec.endpoint,
            eval_dataset=eval_dataset,
        )
        for spec in config.topology.servers
    ]


async def run_federation(
    config: ExperimentConfig,
    data: PreparedData,
    transport: Transport,
) -> Tuple[Dict[str, List[ClientRoundReport]], Dict[str, List[RoundRecord]]]:
    """Run all servers and clients of one experiment to completion."""
    client_ids = sorted(data.partitions)
    topology = build_topology(config.topology, client_ids)
    _check_fault_targets(config, client_ids)

    initial = GlobalModel(weights=initial_weights(data.eval_dataset.feature_count))
    addresses = {
        spec.id: ServerAddress(id=spec.id, endpoint=spec.endpoint)
        for spec in config.topology.servers
    }
    servers = [GlobalServer(cfg, initial, transport) for cfg in server_configs(config, topology, data.eval_dataset)]
    for server in servers:
        await transport.serve(server.config.address, server.handle)
    for cid in client_ids:
        transport.register_client(cid)

    async def client(cid: str) -> List[ClientRoundReport]:
        try:
            return await run_client(
                cid,
                data.partitions[cid],
                [addresses[sid] for sid in topology.client_servers[cid]],
                config.train,
                config.rounds,
                transport,
            )
        finally:
            # A crashed client must not hold the remaining rounds open.
            for round_no in range(1, config.rounds + 1):
                transport.client_round_done(cid, round_no)

    try:
        server_tasks = [asyncio.ensure_future(s.run()) for s in servers]
        client_tasks = {cid: asyncio.ensure_future(client(cid)) for cid in transport.start_order(client_ids)}
        client_results = await asyncio.gather(*client_tasks.values())
        server_results = await asyncio.gather(*server_tasks)
    finally:
        for server in servers:
            await transport.close_listener(server.id)

    clients = dict(zip(client_tasks, client_results))
    records = {s.id: recs for s, recs in zip(servers, server_results)}
    return clients, records


def run_experiment(config: ExperimentConfig, transport: Optional[Transport] = None) -> MetricsBundle:
    """Run one experiment end to end and collect its metrics."""
    started = time.perf_counter()
    data = prepare_data(config)
    prepared = time.perf_counter()

    transport = transport or make_transport(config)
    clients, servers = asyncio.run(run_federation(config, data, transport))
    finished = time.perf_counter()

    bundle = MetricsBundle(
        rounds=config.rounds,
        config_snapshot=config.model_dump(mode="json"),
        eval_digest=dataset_digest(data.eval_dataset),
        clients={cid: clients[cid] for cid in sorted(clients)},
        servers={sid: servers[sid] for sid in sorted(servers)},
        cleaning=data.cleaning,
        timings={"data_s": prepared - started, "federation_s": finished - prepared},
    )
    for sid, records in bundle.servers.items():
        logger.info("%s final eval loss %.6g", sid, bundle.final_loss(sid))
    return bundle


def single_server_baseline(config: ExperimentConfig) -> ExperimentConfig:
    """Same data, seed and training, but only the first configured server."""
    first = config.topology.servers[0]
    others = set(config.topology.server_ids) - {first.id}
    topology = config.topology.model_copy(
        update={"servers": [first], "assignment": "shared", "explicit_map": {}}
    )
    plan = config.fault_plan.model_copy(
        update={"faults": [f for f in config.fault_plan.faults if f.target not in others]}
    )
    return config.model_copy(update={"topology": topology, "fault_plan": plan})


def compare(multi: MetricsBundle, single: MetricsBundle) -> Comparison:
    """Relative gap between each run's best server, overall and per round."""
    if multi.rounds != single.rounds:
        raise MismatchedConfigs(f"Round counts differ: {multi.rounds} vs {single.rounds}")
    if multi.eval_digest != single.eval_digest:
        raise MismatchedConfigs("The runs were evaluated on different holdout splits")
    best_multi, best_single = multi.best_server(), single.best_server()
    if best_multi is None or best_single is None:
        raise MismatchedConfigs("Both bundles need at least one server with round records")

    def gap(a: float, b: float) -> float:
        if b == 0.0:
            return 0.0 if a == 0.0 else float("inf")
        return abs(a - b) / b

    multi_history = eval_history(multi.servers[best_multi])
    single_history = eval_history(single.servers[best_single])
    return Comparison(
        multi_server=best_multi,
        single_server=best_single,
        multi_final_loss=multi.final_loss(best_multi),
        single_final_loss=single.final_loss(best_single),
        relative_final_loss_gap=gap(multi.final_loss(best_multi), single.final_loss(best_single)),
        per_round_gaps=[gap(m, s) for (_, m), (_, s) in zip(multi_history, single_history)],
    )


# ── Export ─────────────────────────────────────────────────────

def _write_csv(path: Path, header: List[str], rows: List[List[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def render_summary(bundle: MetricsBundle) -> str:
    env = Environment(
        loader=FileSystemLoader(str(TEMPLATE_DIR)),
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
    )
    rounds = list(range(1, bundle.rounds + 1))
    return env.get_template("summary.md.j2").render(
        bundle=bundle,
        rounds=rounds,
        deliveries={r: bundle.deliveries(r) for r in rounds},
        best_server=bundle.best_server(),
        failovers=bundle.failover_count(),
        failed=RoundStatus.FAILED,
    )


def export(bundle: MetricsBundle, out_dir: str) -> List[Path]:
    """Write the bundle's CSVs, config snapshot and summary; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    client_rows, delivery_rows = [], []
    for cid in sorted(bundle.clients):
        for report in sorted(bundle.clients[cid], key=lambda r: r.round):
            for epoch, loss in enumerate(report.loss_per_epoch, start=1):
                client_rows.append([cid, report.round, epoch, repr(loss)])
            delivery_rows.append([cid, report.round, report.delivered_to or FAILED])

    server_rows = [
        [sid, record.round, repr(record.eval_loss)]
        for sid in sorted(bundle.servers)
        for record in sorted(bundle.servers[sid], key=lambda r: r.round)
    ]

    paths = {
        "client_loss": out / "client_loss.csv",
        "server_loss": out / "server_loss.csv",
        "delivery": out / "delivery.csv",
        "config": out / "config.json",
        "summary": out / "summary.md",
    }
    _write_csv(paths["client_loss"], ["client_id", "round", "epoch", "loss"], client_rows)
    _write_csv(paths["server_loss"], ["server_id", "round", "eval_loss"], server_rows)
    _write_csv(paths["delivery"], ["client_id", "round", "delivered_to"], delivery_rows)
    paths["config"].write_text(
        json.dumps(bundle.config_snapshot, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    paths["summary"].write_text(render_summary(bundle), encoding="utf-8")

    logger.info("Exported results to %s", out)
    return list(paths.values())


# ── Distributed mode (one process per node) ────────────────────

def _require_endpoints(config: ExperimentConfig) -> None:
    missing = [s.id for s in config.topology.servers if not s.endpoint]
    if missing:
        raise ConfigError(f"Distributed mode needs a host:port endpoint for: {', '.join(missing)}")


async def serve_one(config: ExperimentConfig, server_id: str) -> List[RoundRecord]:
    """Run a single global server over TCP until its rounds are done."""
    _require_endpoints(config)
    data = prepare_data(config)
    topology = build_topology(config.topology, sorted(data.partitions))
    configs = {cfg.id: cfg for cfg in server_configs(config, topology, data.eval_dataset)}
    if server_id not in configs:
        raise ConfigError(f"Unknown server id {server_id!r}; configured: {', '.join(configs)}")

    transport = inject(config.fault_plan, TcpTransport())
    initial = GlobalModel(weights=initial_weights(data.eval_dataset.feature_count))
    return await run_server(configs[server_id], initial, transport)


async def join_one(config: ExperimentConfig, client_id: str) -> List[ClientRoundReport]:
    """Run a single client node over TCP against the configured endpoints."""
    _require_endpoints(config)
    data = prepare_data(config)
    if client_id not in data.partitions:
        raise ConfigError(f"Unknown client id {client_id!r}; known: {', '.join(sorted(data.partitions))}")
    topology = build_topology(config.topology, sorted(data.partitions))
    addresses = {s.id: ServerAddress(id=s.id, endpoint=s.endpoint) for s in config.topology.servers}

    transport = make_transport(config)
    return await run_client(
        client_id,
        data.partitions[client_id],
        [addresses[sid] for sid in topology.client_servers[client_id]],
        config.train,
        config.rounds,
        transport,
    )
