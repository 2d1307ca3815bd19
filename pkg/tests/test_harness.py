"""End-to-end tests for the experiment harness on the simulated network."""

import csv

import pytest

from src.client import ClientRoundReport
from src.config import ExperimentConfig, ServerSpec, TopologyConfig
from src.errors import MismatchedConfigs, TopologyError
from src.harness import (
    FAILED,
    MetricsBundle,
    build_topology,
    compare,
    export,
    run_experiment,
    single_server_baseline,
)
from src.server import RoundRecord, RoundStatus
from src.transport import Fault, FaultPlan

REGIONS = [f"region-{i}" for i in range(1, 10)]


def read_rows(path):
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def default_bundle():
    return run_experiment(ExperimentConfig())


@pytest.fixture(scope="module")
def disjoint_config():
    return ExperimentConfig(topology=TopologyConfig(assignment="disjoint"))


class TestBuildTopology:

    def test_shared(self):
        topology = build_topology(TopologyConfig(), REGIONS)
        assert topology.client_servers["region-4"] == ["gs1", "gs2"]
        assert topology.expected["gs2"] == REGIONS
        assert topology.quorums == {"gs1": 9, "gs2": 1}

    def test_disjoint_blocks(self):
        topology = build_topology(TopologyConfig(assignment="disjoint"), REGIONS)
        assert topology.client_servers["region-1"] == ["gs1", "gs2"]
        assert topology.client_servers["region-9"] == ["gs2", "gs1"]
        assert topology.quorums == {"gs1": 5, "gs2": 4}

    def test_explicit_missing_client(self):
        config = TopologyConfig(assignment="explicit", explicit_map={"region-1": ["gs2", "gs1"]})
        with pytest.raises(TopologyError, match="region-2"):
            build_topology(config, ["region-1", "region-2"])

    def test_server_without_clients(self):
        config = TopologyConfig(assignment="explicit", explicit_map={"region-1": ["gs1"]})
        with pytest.raises(TopologyError, match="gs2"):
            build_topology(config, ["region-1"])

    def test_client_count_mismatch(self):
        with pytest.raises(TopologyError):
            build_topology(TopologyConfig(clients=3), REGIONS)

    def test_quorum_above_cohort(self):
        config = TopologyConfig(
            servers=[ServerSpec(id="gs1", quorum=3)],
            assignment="explicit",
            explicit_map={"region-1": ["gs1"], "region-2": ["gs1"]},
        )
        with pytest.raises(TopologyError):
            build_topology(config, ["region-1", "region-2"])


class TestRunExperiment:
    """Default two-server, nine-region run."""

    def test_shape(self, default_bundle):
        assert sorted(default_bundle.clients) == REGIONS
        assert all(len(reports) == 3 for reports in default_bundle.clients.values())
        assert sorted(default_bundle.servers) == ["gs1", "gs2"]
        assert all(len(records) == 3 for records in default_bundle.servers.values())

    def test_primary_server_converges(self, default_bundle):
        losses = [r.eval_loss for r in sorted(default_bundle.servers["gs1"], key=lambda r: r.round)]
        assert losses[2] <= 0.1 * losses[0]

    def test_local_loss_decreases(self, default_bundle):
        for reports in default_bundle.clients.values():
            first = reports[0].loss_per_epoch
            assert len(first) == 25
            assert all(loss > 0 for loss in first)
            assert first[-1] < first[0]

    def test_idle_server_fails_every_round(self, default_bundle):
        assert all(r.status is RoundStatus.FAILED for r in default_bundle.servers["gs2"])
        assert default_bundle.best_server() == "gs1"

    def test_deliveries_are_conserved(self, default_bundle):
        for round_no in (1, 2, 3):
            assert sum(default_bundle.deliveries(round_no).values()) == 9

    def test_failover_drill(self):
        plan = FaultPlan(faults=[Fault(target="gs1", start_round=2)])
        bundle = run_experiment(ExperimentConfig(fault_plan=plan))
        assert bundle.deliveries(1) == {"gs1": 9}
        assert bundle.deliveries(2) == {"gs2": 9}
        assert bundle.deliveries(3) == {"gs2": 9}
        statuses = [r.status for r in bundle.servers["gs2"]]
        assert statuses == [RoundStatus.FAILED, RoundStatus.AGGREGATED, RoundStatus.AGGREGATED]
        assert bundle.failover_count() == 18

    def test_all_servers_killed(self):
        plan = FaultPlan(faults=[Fault(target="gs1"), Fault(target="gs2")])
        bundle = run_experiment(ExperimentConfig(fault_plan=plan))
        for reports in bundle.clients.values():
            assert [r.error for r in reports] == ["Failed to connect to all servers."] * 3
        assert bundle.deliveries(2) == {FAILED: 9}

    def test_unknown_fault_target(self):
        plan = FaultPlan(faults=[Fault(target="gs7")])
        with pytest.raises(TopologyError):
            run_experiment(ExperimentConfig(fault_plan=plan))


class TestCompare:

    def test_shared_cohort_gap_is_zero(self):
        config = ExperimentConfig()
        result = compare(run_experiment(config), run_experiment(single_server_baseline(config)))
        assert result.relative_final_loss_gap == 0.0
        assert result.per_round_gaps == [0.0, 0.0, 0.0]

    def test_disjoint_cohort_gap_below_one_percent(self, disjoint_config):
        multi = run_experiment(disjoint_config)
        single = run_experiment(single_server_baseline(disjoint_config))
        assert compare(multi, single).relative_final_loss_gap < 0.01

    def test_faulted_second_server_matches_baseline(self, tmp_path):
        config = ExperimentConfig(fault_plan=FaultPlan(faults=[Fault(target="gs2")]))
        multi = run_experiment(config)
        single = run_experiment(single_server_baseline(config))
        assert multi.servers["gs1"] == single.servers["gs1"]
        assert multi.deliveries(3) == single.deliveries(3) == {"gs1": 9}

        export(multi, str(tmp_path / "multi"))
        export(single, str(tmp_path / "single"))
        for name in ("client_loss.csv", "delivery.csv"):
            assert (tmp_path / "multi" / name).read_bytes() == (tmp_path / "single" / name).read_bytes()
        # gs2 still reports its three failed rounds; everything else matches
        multi_rows = read_rows(tmp_path / "multi" / "server_loss.csv")
        single_rows = read_rows(tmp_path / "single" / "server_loss.csv")
        assert [r for r in multi_rows if r[0] != "gs2"] == single_rows
        assert [r[:2] for r in multi_rows if r[0] == "gs2"] == [["gs2", "1"], ["gs2", "2"], ["gs2", "3"]]
        assert all(r.status is RoundStatus.FAILED for r in multi.servers["gs2"])

    def test_self_comparison(self, default_bundle):
        result = compare(default_bundle, default_bundle)
        assert result.relative_final_loss_gap == 0.0
        assert result.multi_server == result.single_server == "gs1"

    def test_mismatched_rounds(self, default_bundle):
        other = default_bundle.model_copy(update={"rounds": 5})
        with pytest.raises(MismatchedConfigs):
            compare(default_bundle, other)

    def test_baseline_keeps_first_server_only(self, disjoint_config):
        plan = FaultPlan(faults=[Fault(target="gs2", start_round=1)])
        baseline = single_server_baseline(disjoint_config.model_copy(update={"fault_plan": plan}))
        assert baseline.topology.server_ids == ["gs1"]
        assert baseline.topology.assignment == "shared"
        assert not baseline.fault_plan


class TestExport:

    def test_files_and_headers(self, default_bundle, tmp_path):
        paths = export(default_bundle, str(tmp_path))
        assert sorted(p.name for p in paths) == [
            "client_loss.csv", "config.json", "delivery.csv", "server_loss.csv", "summary.md"
        ]
        server_rows = read_rows(tmp_path / "server_loss.csv")
        assert server_rows[0] == ["server_id", "round", "eval_loss"]
        assert len(server_rows) == 7
        client_rows = read_rows(tmp_path / "client_loss.csv")
        assert client_rows[0] == ["client_id", "round", "epoch", "loss"]
        assert len(client_rows) == 1 + 9 * 3 * 25
        assert b"\r\n" not in (tmp_path / "delivery.csv").read_bytes()

    def test_summary_mentions_failed_rounds(self, default_bundle, tmp_path):
        export(default_bundle, str(tmp_path))
        summary = (tmp_path / "summary.md").read_text(encoding="utf-8")
        assert "Best server: gs1" in summary
        assert "### Failed rounds on gs2" in summary

    def test_empty_bundle(self, tmp_path):
        export(MetricsBundle(), str(tmp_path))
        assert read_rows(tmp_path / "client_loss.csv") == [["client_id", "round", "epoch", "loss"]]
        assert read_rows(tmp_path / "delivery.csv") == [["client_id", "round", "delivered_to"]]
        assert "Best server: n/a" in (tmp_path / "summary.md").read_text(encoding="utf-8")

    def test_failed_delivery_is_marked(self, tmp_path):
        bundle = MetricsBundle(
            rounds=1,
            clients={"c1": [ClientRoundReport(client_id="c1", round=1,
                                              error="Failed to connect to all servers.")]},
            servers={"gs1": [RoundRecord(server_id="gs1", round=1, status=RoundStatus.FAILED,
                                         eval_loss=1.0, error="quorum")]},
        )
        export(bundle, str(tmp_path))
        assert read_rows(tmp_path / "delivery.csv")[1] == ["c1", "1", "FAILED"]

    def test_reruns_are_bytewise_identical(self, tmp_path):
        config = ExperimentConfig(fault_plan=FaultPlan(faults=[Fault(target="gs1", start_round=3)]))
        first, second = tmp_path / "a", tmp_path / "b"
        export(run_experiment(config), str(first))
        export(run_experiment(config), str(second))
        for name in ("client_loss.csv", "server_loss.csv", "delivery.csv", "config.json", "summary.md"):
            assert (first / name).read_bytes() == (second / name).read_bytes()
