"""Tests for the command-line entry point."""

import json

import pytest
import yaml

from src.main import EXIT_CONFIG, EXIT_OK, build_parser, main


@pytest.fixture
def small_config(tmp_path):
    config_file = tmp_path / "small.yaml"
    config_file.write_text(yaml.dump({
        "rounds": 2,
        "data": {"synthetic": {"rows_per_region": 30, "regions": 3}},
        "train": {"epochs": 5},
    }))
    return str(config_file)


class TestParser:

    def test_listen_and_join_are_exclusive(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["run", "--listen", "gs1", "--join", "region-1"])

    def test_command_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestCommands:

    def test_gen_data(self, small_config, tmp_path):
        out = tmp_path / "data"
        assert main(["gen-data", "--config", small_config, "--out", str(out)]) == EXIT_OK
        assert (out / "events.csv").exists()
        assert (out / "stations.csv").exists()

    def test_run_exports(self, small_config, tmp_path, capsys):
        out = tmp_path / "results"
        assert main(["run", "--config", small_config, "--out", str(out)]) == EXIT_OK
        assert (out / "server_loss.csv").exists()
        assert (out / "summary.md").exists()
        assert "gs1: final eval loss" in capsys.readouterr().out

    def test_compare_writes_gap(self, small_config, tmp_path):
        out = tmp_path / "cmp"
        assert main(["compare", "--config", small_config, "--out", str(out)]) == EXIT_OK
        result = json.loads((out / "comparison.json").read_text(encoding="utf-8"))
        assert result["relative_final_loss_gap"] == 0.0
        assert (out / "multi" / "delivery.csv").exists()
        assert (out / "single" / "delivery.csv").exists()

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        config_file = tmp_path / "bad.yaml"
        config_file.write_text(yaml.dump({"rounds": -1}))
        assert main(["run", "--config", str(config_file)]) == EXIT_CONFIG
        assert "Config error" in capsys.readouterr().err

    def test_listen_without_endpoints(self, small_config):
        assert main(["run", "--config", small_config, "--listen", "gs1"]) == EXIT_CONFIG
